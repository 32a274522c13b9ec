"""Corpus ingestion, train/test splitting and audio-image alignment.

Images stay as uint8 arrays in memory (``/255`` on access); spectrograms are
float32. A :class:`PairSet` stores each distinct spectrogram once and refers to
it by index from every pair that uses it.
"""
from __future__ import annotations

import gzip
import logging
import re
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .audio import AudioClip, DspConfig, Spectrogram, clip_to_spectrogram, read_wav

log = logging.getLogger(__name__)

IMAGE_SIZE = 28
N_CLASSES = 10
DIGIT_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")
MANY_TO_ONE = "many_to_one"
ONE_TO_ONE = "one_to_one"

_FSDD_NAME = re.compile(r"^(\d)_([A-Za-z]+)_(\d+)\.wav$")


class DatasetError(ValueError):
    pass


def derive_rng(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for a named pipeline stage under one master seed."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=(zlib.crc32(stage.encode("utf-8")),))
    return np.random.Generator(np.random.PCG64(ss))


# ---------------------------------------------------------------------------
# containers
# ---------------------------------------------------------------------------

@dataclass
class ImageSample:
    pixels: np.ndarray
    label: int
    index: int = -1

    def __post_init__(self):
        if self.pixels.shape != (IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError(f"image must be 28x28, got {self.pixels.shape}")


@dataclass
class ImageSet:
    images: np.ndarray  # uint8 [N, 28, 28]
    labels: np.ndarray  # uint8 [N]

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> ImageSample:
        return ImageSample(self.images[i].astype(np.float32) / 255.0, int(self.labels[i]), int(i))

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def float_images(self) -> np.ndarray:
        return self.images.astype(np.float32) / 255.0


@dataclass
class SpectrogramSet:
    pixels: np.ndarray  # float32 [M, 48, 48]
    labels: np.ndarray  # uint8 [M]
    source_ids: list

    @classmethod
    def from_list(cls, specs: Sequence[Spectrogram]) -> "SpectrogramSet":
        if not specs:
            return cls(np.zeros((0, 48, 48), np.float32), np.zeros(0, np.uint8), [])
        return cls(
            np.stack([s.pixels for s in specs]).astype(np.float32),
            np.array([s.label for s in specs], dtype=np.uint8),
            [s.source_id for s in specs],
        )

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> Spectrogram:
        return Spectrogram(self.pixels[i], int(self.labels[i]), self.source_ids[i])

    def subset(self, idx) -> "SpectrogramSet":
        idx = np.asarray(idx, dtype=np.int64)
        return SpectrogramSet(self.pixels[idx], self.labels[idx], [self.source_ids[i] for i in idx])


@dataclass
class AlignedPair:
    audio: Spectrogram
    image: ImageSample

    def __post_init__(self):
        if self.audio.label != self.image.label:
            raise ValueError(f"label mismatch: audio {self.audio.label} vs image {self.image.label}")


@dataclass
class PairSet:
    labels: np.ndarray  # uint8 [N]
    images: np.ndarray  # uint8 [N, 28, 28]
    image_ids: np.ndarray  # uint32 [N], index into the source image file
    audio_index: np.ndarray  # uint32 [N], row of ``spectrograms``
    spectrograms: np.ndarray  # float32 [M, 48, 48]
    source_ids: list  # M audio provenance ids
    mapping_kind: str
    split: str
    seed: int
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> AlignedPair:
        a = int(self.audio_index[i])
        lab = int(self.labels[i])
        return AlignedPair(
            Spectrogram(self.spectrograms[a], lab, self.source_ids[a]),
            ImageSample(self.images[i].astype(np.float32) / 255.0, lab, int(self.image_ids[i])),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def subset(self, idx) -> "PairSet":
        """Pairs at ``idx`` (same spectrogram table)."""
        idx = np.asarray(idx, dtype=np.int64)
        return PairSet(self.labels[idx], self.images[idx], self.image_ids[idx], self.audio_index[idx],
                       self.spectrograms, list(self.source_ids), self.mapping_kind, self.split, self.seed,
                       dict(self.extra))

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(spectrograms [B,1,48,48], images [B,1,28,28], labels [B]) as float32 / int64."""
        idx = np.asarray(idx, dtype=np.int64)
        spec = self.spectrograms[self.audio_index[idx]][:, None]
        img = (self.images[idx].astype(np.float32) / 255.0)[:, None]
        return spec, img, self.labels[idx].astype(np.int64)

    def compact(self) -> "PairSet":
        """Drop spectrograms no pair refers to; keeps the original table order."""
        used = np.unique(self.audio_index)
        remap = np.full(len(self.source_ids), -1, dtype=np.int64)
        remap[used] = np.arange(len(used))
        self.spectrograms = np.ascontiguousarray(self.spectrograms[used])
        self.source_ids = [self.source_ids[i] for i in used]
        self.audio_index = remap[self.audio_index].astype(np.uint32)
        return self

    def spectrogram_labels(self) -> np.ndarray:
        out = np.zeros(len(self.source_ids), dtype=np.int64) - 1
        out[self.audio_index] = self.labels
        return out

    def validate(self) -> None:
        """Check the label and mapping-multiplicity invariants; raise DatasetError on violation."""
        if self.mapping_kind not in (MANY_TO_ONE, ONE_TO_ONE):
            raise DatasetError(f"unknown mapping kind {self.mapping_kind!r}")
        spec_labels = np.full(len(self.source_ids), -1, dtype=np.int64)
        for lab in range(N_CLASSES):
            members = np.unique(self.audio_index[self.labels == lab])
            if np.any((spec_labels[members] != -1) & (spec_labels[members] != lab)):
                raise DatasetError("a spectrogram is paired with images of different labels")
            spec_labels[members] = lab
        if self.mapping_kind == ONE_TO_ONE and len(np.unique(self.audio_index)) != len(self):
            raise DatasetError("one_to_one pair set reuses a spectrogram")
        if len(np.unique(self.image_ids)) != len(self):
            raise DatasetError("an image appears in more than one pair")


# ---------------------------------------------------------------------------
# MNIST IDX
# ---------------------------------------------------------------------------

def _read_maybe_gz(path) -> bytes:
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        return fh.read()


def load_mnist_idx(images_path, labels_path) -> ImageSet:
    """Parse an IDX image/label file pair (optionally gzipped)."""
    img = _read_maybe_gz(images_path)
    lab = _read_maybe_gz(labels_path)
    if len(img) < 16 or len(lab) < 8:
        raise DatasetError("IDX header truncated")
    magic, n, rows, cols = struct.unpack_from(">IIII", img, 0)
    if magic != 0x00000803:
        raise DatasetError(f"{images_path}: bad image magic {magic:#010x}, expected 0x00000803")
    lmagic, ln = struct.unpack_from(">II", lab, 0)
    if lmagic != 0x00000801:
        raise DatasetError(f"{labels_path}: bad label magic {lmagic:#010x}, expected 0x00000801")
    if (rows, cols) != (IMAGE_SIZE, IMAGE_SIZE):
        raise DatasetError(f"{images_path}: images are {rows}x{cols}, expected 28x28")
    if n != ln:
        raise DatasetError(f"count mismatch: {n} images vs {ln} labels")
    if len(img) != 16 + n * rows * cols or len(lab) != 8 + n:
        raise DatasetError("IDX payload length does not match header count")
    images = np.frombuffer(img, dtype=np.uint8, offset=16).reshape(n, rows, cols).copy()
    labels = np.frombuffer(lab, dtype=np.uint8, offset=8).copy()
    if labels.max(initial=0) >= N_CLASSES:
        raise DatasetError("label outside 0..9")
    return ImageSet(images, labels)


def write_mnist_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, r, c = images.shape
    Path(images_path).write_bytes(struct.pack(">IIII", 0x803, n, r, c) + images.tobytes())
    Path(labels_path).write_bytes(struct.pack(">II", 0x801, n) + labels.tobytes())


def find_mnist_files(mnist_dir, split: str) -> tuple[Path, Path]:
    """Locate ``{train,t10k}-{images-idx3,labels-idx1}-ubyte[.gz]`` under ``mnist_dir``."""
    prefix = "train" if split == "train" else "t10k"
    d = Path(mnist_dir)
    found = []
    for kind in ("images-idx3", "labels-idx1"):
        for suffix in ("-ubyte", "-ubyte.gz", ".ubyte", ".ubyte.gz"):
            p = d / f"{prefix}-{kind}{suffix}"
            if p.exists():
                found.append(p)
                break
        else:
            raise DatasetError(f"MNIST file {prefix}-{kind}-ubyte not found in {d}")
    return found[0], found[1]


def load_mnist(mnist_dir, split: str) -> ImageSet:
    return load_mnist_idx(*find_mnist_files(mnist_dir, split))


# ---------------------------------------------------------------------------
# audio corpora
# ---------------------------------------------------------------------------

def load_fsdd(directory) -> list[AudioClip]:
    """All ``{digit}_{speaker}_{index}.wav`` recordings, sorted by file name."""
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"FSDD directory not found: {d}")
    if (d / "recordings").is_dir():
        d = d / "recordings"
    clips = []
    for path in sorted(d.glob("*.wav")):
        m = _FSDD_NAME.match(path.name)
        if not m:
            log.warning("skipping FSDD file with unparsable name: %s", path.name)
            continue
        clips.append(read_wav(path, label=int(m.group(1)), source_id=f"fsdd/{path.name}"))
    if not clips:
        raise DatasetError(f"no clips found in {d}")
    log.info("loaded %d FSDD clips from %s", len(clips), d)
    return clips


def load_scd_digits(directory) -> list[AudioClip]:
    """Recordings from the ten digit-word folders of a Speech Commands tree."""
    d = Path(directory)
    if not d.is_dir():
        raise DatasetError(f"SCD directory not found: {d}")
    missing = [w for w in DIGIT_WORDS if not (d / w).is_dir()]
    if missing:
        raise DatasetError(f"SCD directory {d} lacks digit folders: {', '.join(missing)}")
    clips = []
    for label, word in enumerate(DIGIT_WORDS):
        for path in sorted((d / word).glob("*.wav")):
            clips.append(read_wav(path, label=label, source_id=f"scd/{word}/{path.name}"))
    if not clips:
        raise DatasetError(f"no clips found in {d}")
    log.info("loaded %d SCD digit clips from %s", len(clips), d)
    return clips


def spectrograms_from_clips(clips: Iterable[AudioClip], cfg: DspConfig = DspConfig()) -> SpectrogramSet:
    return SpectrogramSet.from_list([clip_to_spectrogram(c, cfg) for c in clips])


# ---------------------------------------------------------------------------
# splitting and alignment
# ---------------------------------------------------------------------------

def split_90_10(items: Sequence, seed: int, stage: str = "split", labels: Optional[Sequence[int]] = None):
    """Seeded random 90/10 split; the train part gets ``floor(0.9 n)`` items.

    With ``labels`` the split is stratified: each class is split 90/10 on its
    own (classes visited in ascending order).
    """
    rng = derive_rng(seed, stage)
    n = len(items)
    if labels is None:
        perm = rng.permutation(n)
        n_train = n * 9 // 10
        train_idx, test_idx = perm[:n_train], perm[n_train:]
    else:
        labels = np.asarray(labels)
        train_parts, test_parts = [], []
        for lab in np.unique(labels):
            members = np.nonzero(labels == lab)[0]
            members = members[rng.permutation(len(members))]
            k = len(members) * 9 // 10
            train_parts.append(members[:k])
            test_parts.append(members[k:])
        train_idx, test_idx = np.concatenate(train_parts), np.concatenate(test_parts)
    pick = (lambda idx: items.subset(idx)) if hasattr(items, "subset") else (lambda idx: [items[i] for i in idx])
    return pick(train_idx), pick(test_idx)


def _check_classes(images: ImageSet, specs: SpectrogramSet, need_images: bool) -> None:
    img_counts = np.bincount(images.labels, minlength=N_CLASSES)
    spec_counts = np.bincount(specs.labels, minlength=N_CLASSES)
    for lab in range(N_CLASSES):
        if img_counts[lab] and not spec_counts[lab]:
            raise DatasetError(f"class {lab} has {img_counts[lab]} images but no spectrograms")
        if need_images and spec_counts[lab] and not img_counts[lab]:
            raise DatasetError(f"class {lab} has spectrograms but no images")


def align_many_to_one(images: ImageSet, specs: SpectrogramSet, seed: int, split: str = "train",
                      stage: Optional[str] = None) -> PairSet:
    """Every image once (random order); each gets a same-label spectrogram drawn with replacement."""
    _check_classes(images, specs, need_images=False)
    rng = derive_rng(seed, stage or f"fsdd-align-{split}")
    order = rng.permutation(len(images))
    labels = images.labels[order]
    audio = np.zeros(len(order), dtype=np.uint32)
    for lab in range(N_CLASSES):
        slots = np.nonzero(labels == lab)[0]
        if not len(slots):
            continue
        pool = np.nonzero(specs.labels == lab)[0]
        audio[slots] = pool[rng.integers(0, len(pool), size=len(slots))]
    ps = PairSet(
        labels=labels.astype(np.uint8),
        images=np.ascontiguousarray(images.images[order]),
        image_ids=order.astype(np.uint32),
        audio_index=audio,
        spectrograms=specs.pixels,
        source_ids=list(specs.source_ids),
        mapping_kind=MANY_TO_ONE,
        split=split,
        seed=int(seed),
    )
    return ps.compact()


def align_one_to_one(images: ImageSet, specs: SpectrogramSet, seed: int, split: str = "train",
                     stage: Optional[str] = None, balanced: bool = False) -> PairSet:
    """Per class, pair spectrograms and images drawn without replacement.

    Each class yields ``min(#spectrograms, #images)`` pairs. ``balanced`` caps
    every class at the smallest such count, which is what drawing one pair per
    class in turn until some class runs dry produces.
    """
    _check_classes(images, specs, need_images=True)
    rng = derive_rng(seed, stage or f"scd-align-{split}")
    per_class = []
    for lab in range(N_CLASSES):
        s_pool = np.nonzero(specs.labels == lab)[0]
        i_pool = np.nonzero(images.labels == lab)[0]
        if not len(s_pool) or not len(i_pool):
            raise DatasetError(f"class {lab} is empty on the {'audio' if not len(s_pool) else 'image'} side")
        s_pick = s_pool[rng.permutation(len(s_pool))]
        i_pick = i_pool[rng.permutation(len(i_pool))]
        per_class.append((s_pick, i_pick))
    cap = min(min(len(s), len(i)) for s, i in per_class) if balanced else None
    s_all, i_all = [], []
    for s_pick, i_pick in per_class:
        k = min(len(s_pick), len(i_pick)) if cap is None else cap
        s_all.append(s_pick[:k])
        i_all.append(i_pick[:k])
    s_idx, i_idx = np.concatenate(s_all), np.concatenate(i_all)
    shuffle = rng.permutation(len(s_idx))
    s_idx, i_idx = s_idx[shuffle], i_idx[shuffle]
    ps = PairSet(
        labels=images.labels[i_idx].astype(np.uint8),
        images=np.ascontiguousarray(images.images[i_idx]),
        image_ids=i_idx.astype(np.uint32),
        audio_index=s_idx.astype(np.uint32),
        spectrograms=specs.pixels,
        source_ids=list(specs.source_ids),
        mapping_kind=ONE_TO_ONE,
        split=split,
        seed=int(seed),
    )
    return ps.compact()
