import logging
import struct

import numpy as np
import pytest

from crossgen.dataset import (
    MANY_TO_ONE,
    DatasetError,
    ImageSet,
    SpectrogramSet,
    align_many_to_one,
    align_one_to_one,
    load_fsdd,
    load_mnist,
    load_mnist_idx,
    load_scd_digits,
    spectrograms_from_clips,
    split_90_10,
)
from crossgen.pairfile import PairFileError, decode_pairset, encode_pairset, file_checksum, read_pairset, write_pairset


def image_set(labels):
    labels = np.asarray(labels, dtype=np.uint8)
    images = (np.arange(len(labels) * 784) % 251).astype(np.uint8).reshape(-1, 28, 28)
    return ImageSet(images, labels)


def spec_set(labels, prefix="s"):
    labels = np.asarray(labels, dtype=np.uint8)
    pix = np.random.default_rng(len(labels)).uniform(size=(len(labels), 48, 48)).astype(np.float32)
    return SpectrogramSet(pix, labels, [f"{prefix}{i}" for i in range(len(labels))])


class TestMnistIdx:
    def test_counts_and_range(self, corpora):
        train = load_mnist(corpora["mnist"], "train")
        test = load_mnist(corpora["mnist"], "test")
        assert len(train) == 200 and len(test) == 60
        s = train[0]
        assert s.pixels.shape == (28, 28) and 0 <= s.pixels.min() and s.pixels.max() <= 1

    def test_label_magic_rejected(self, tmp_path, corpora):
        img = corpora["mnist"] / "train-images-idx3-ubyte"
        bad = tmp_path / "labels"
        bad.write_bytes(struct.pack(">II", 0x803, 200) + bytes(200))
        with pytest.raises(DatasetError, match="magic"):
            load_mnist_idx(img, bad)

    def test_count_mismatch(self, tmp_path, corpora):
        img = corpora["mnist"] / "train-images-idx3-ubyte"
        bad = tmp_path / "labels"
        bad.write_bytes(struct.pack(">II", 0x801, 199) + bytes(199))
        with pytest.raises(DatasetError, match="count mismatch"):
            load_mnist_idx(img, bad)

    def test_gzip(self, tmp_path, corpora):
        import gzip
        for name in ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"):
            (tmp_path / f"{name}.gz").write_bytes(gzip.compress((corpora["mnist"] / name).read_bytes()))
        assert len(load_mnist(tmp_path, "test")) == 60


class TestAudioCorpora:
    def test_fsdd(self, corpora, caplog):
        with caplog.at_level(logging.WARNING):
            clips = load_fsdd(corpora["fsdd"])
        assert len(clips) == 60
        assert "unparsable" in caplog.text
        counts = {}
        for c in clips:
            spk = c.source_id.split("_")[1]
            counts[(c.label, spk)] = counts.get((c.label, spk), 0) + 1
        assert set(counts.values()) == {3}
        assert all(c.sample_rate == 8000 for c in clips)

    def test_fsdd_empty(self, tmp_path):
        with pytest.raises(DatasetError, match="no clips found"):
            load_fsdd(tmp_path)

    def test_scd_digits_only(self, corpora):
        clips = load_scd_digits(corpora["scd"])
        words = {c.source_id.split("/")[1] for c in clips}
        assert words == {"zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"}
        assert len(clips) == sum(8 + d % 3 for d in range(10)) + 1

    def test_scd_short_clip_survives(self, corpora):
        clips = [c for c in load_scd_digits(corpora["scd"]) if "short" in c.source_id]
        spec = spectrograms_from_clips(clips)
        assert spec.pixels.shape == (1, 48, 48)

    def test_scd_missing_class(self, tmp_path):
        (tmp_path / "zero").mkdir()
        with pytest.raises(DatasetError, match="one, two"):
            load_scd_digits(tmp_path)


class TestSplit:
    def test_fsdd_sized(self):
        train, test = split_90_10(list(range(2000)), seed=1)
        assert (len(train), len(test)) == (1800, 200)

    def test_floor_rule(self):
        train, test = split_90_10(list(range(10)), seed=1)
        assert (len(train), len(test)) == (9, 1)
        train, test = split_90_10(list(range(19)), seed=1)
        assert (len(train), len(test)) == (17, 2)

    def test_disjoint_exhaustive_deterministic(self):
        items = list(range(150))
        a = split_90_10(items, seed=7)
        b = split_90_10(items, seed=7)
        c = split_90_10(items, seed=8)
        assert a == b
        assert a[0] != c[0]
        assert sorted(a[0] + a[1]) == items and not set(a[0]) & set(a[1])

    def test_stratified(self):
        labels = np.repeat(np.arange(10), [2376, 2370, 2373, 2356, 2372, 2357, 2369, 2377, 2352, 2364])
        train, test = split_90_10(list(range(len(labels))), seed=0, labels=labels)
        per_train = np.bincount(labels[train], minlength=10)
        assert per_train.min() == 2116 and len(train) + len(test) == 23666

    def test_spectrogram_set_subset(self):
        s = spec_set([0, 1, 2, 3] * 5)
        train, test = split_90_10(s, seed=3)
        assert len(train) == 18 and len(test) == 2
        assert not set(train.source_ids) & set(test.source_ids)


class TestAlignManyToOne:
    def test_minimal(self):
        ps = align_many_to_one(image_set(range(10)), spec_set(range(10)), seed=0)
        assert len(ps) == 10 and ps.mapping_kind == MANY_TO_ONE
        for pair in ps:
            assert pair.audio.label == pair.image.label
        ps.validate()

    def test_each_image_once_and_reuse(self):
        images = image_set(np.arange(500) % 10)
        ps = align_many_to_one(images, spec_set(np.arange(30) % 10), seed=4)
        assert len(ps) == 500
        assert sorted(ps.image_ids.tolist()) == list(range(500))
        assert len(np.unique(ps.audio_index)) < len(ps)
        ps.validate()

    def test_missing_class(self):
        with pytest.raises(DatasetError, match="class 9"):
            align_many_to_one(image_set(range(10)), spec_set(range(9)), seed=0)

    def test_partner_distribution_uniform(self):
        images = image_set(np.zeros(6000, dtype=int))
        ps = align_many_to_one(images, spec_set([0, 0, 0]), seed=2)
        counts = np.bincount(ps.audio_index, minlength=3)
        assert np.all(np.abs(counts - 2000) < 5 * np.sqrt(6000 * (1 / 3) * (2 / 3)))


class TestAlignOneToOne:
    def test_min_rule(self):
        images = image_set([0] * 5 + list(range(1, 10)))
        specs = spec_set([0] * 3 + list(range(1, 10)))
        ps = align_one_to_one(images, specs, seed=0)
        assert np.sum(ps.labels == 0) == 3
        assert len(np.unique(ps.audio_index)) == len(ps) == 12
        ps.validate()

    def test_balanced(self):
        images = image_set(np.arange(100) % 10)
        specs = spec_set([0] * 2 + list(np.arange(50) % 10))
        ps = align_one_to_one(images, specs, seed=0, balanced=True)
        assert np.bincount(ps.labels).tolist() == [5] * 10

    def test_empty_class(self):
        with pytest.raises(DatasetError, match="class 3"):
            align_one_to_one(image_set([0, 1, 2, 4, 5, 6, 7, 8, 9]), spec_set(range(10)), seed=0)

    def test_deterministic(self):
        images, specs = image_set(np.arange(80) % 10), spec_set(np.arange(40) % 10)
        a = align_one_to_one(images, specs, seed=5)
        b = align_one_to_one(images, specs, seed=5)
        assert encode_pairset(a) == encode_pairset(b)


class TestPairFile:
    def _ps(self):
        return align_many_to_one(image_set(np.arange(10) % 10), spec_set(range(10)), seed=11, split="test")

    def test_round_trip(self, tmp_path):
        ps = self._ps()
        crc = write_pairset(tmp_path / "a.aipx", ps)
        back = read_pairset(tmp_path / "a.aipx")
        assert crc == file_checksum(tmp_path / "a.aipx")
        assert back.images.tobytes() == ps.images.tobytes()
        assert back.spectrograms.tobytes() == ps.spectrograms.tobytes()
        assert back.labels.tolist() == ps.labels.tolist()
        assert back.source_ids == ps.source_ids
        assert (back.mapping_kind, back.split, back.seed) == (ps.mapping_kind, "test", 11)
        assert encode_pairset(back) == encode_pairset(ps)

    def test_flipped_magic(self):
        data = bytearray(encode_pairset(self._ps()))
        data[0] ^= 0xFF
        with pytest.raises(PairFileError, match="magic"):
            decode_pairset(bytes(data))

    def test_truncated(self):
        data = encode_pairset(self._ps())
        with pytest.raises(PairFileError):
            decode_pairset(data[: len(data) // 2])

    def test_bit_flip_in_payload(self):
        data = bytearray(encode_pairset(self._ps()))
        data[len(data) // 2] ^= 0x01
        with pytest.raises(PairFileError, match="checksum"):
            decode_pairset(bytes(data))

    def test_synthetic_pipeline_invariants(self, corpora):
        clips = load_fsdd(corpora["fsdd"])
        specs = spectrograms_from_clips(clips)
        tr, te = split_90_10(specs, seed=0, stage="fsdd-split")
        mnist_tr = load_mnist(corpora["mnist"], "train")
        ps = align_many_to_one(mnist_tr, tr, seed=0)
        ps.validate()
        assert len(ps) == len(mnist_tr)
        assert set(ps.source_ids) <= set(tr.source_ids)
        assert not set(tr.source_ids) & set(te.source_ids)
