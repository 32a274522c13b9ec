import struct
import zlib

import numpy as np
import pytest

from crossgen.checkpoint import (
    CheckpointError,
    capture,
    decode_checkpoint,
    encode_checkpoint,
    load_checkpoint,
    restore,
    save_checkpoint,
    to_model,
)
from crossgen.models import AivaeganModel, Lenet5Model


def gan_with_stats(seed=0):
    m = AivaeganModel(seed=seed)
    rng = np.random.default_rng(seed)
    m.forward(rng.uniform(size=(3, 1, 48, 48)).astype(np.float32), np.zeros((3, 64), np.float32))
    m.discriminate(rng.uniform(size=(3, 1, 28, 28)).astype(np.float32))
    for store in m.stores().values():
        store.step_count = 7
        for name in store.adam_m:
            store.adam_m[name][...] = rng.normal(size=store.adam_m[name].shape)
    return m.eval()


@pytest.fixture(scope="module")
def gan():
    return gan_with_stats()


class TestRoundTrip:
    def test_forward_bit_identical(self, gan, tmp_path):
        rng = np.random.default_rng(9)
        ckpt = capture(gan, {"latent_dim": 64}, epoch=3, rng=rng)
        save_checkpoint(tmp_path / "g.aick", ckpt)
        back = to_model(load_checkpoint(tmp_path / "g.aick", "aivaegan")).eval()
        x = np.random.default_rng(1).uniform(size=(2, 1, 48, 48)).astype(np.float32)
        eps = np.random.default_rng(2).normal(size=(2, 64)).astype(np.float32)
        assert gan.forward(x, eps)[0].data.tobytes() == back.forward(x, eps)[0].data.tobytes()
        img = np.random.default_rng(3).uniform(size=(2, 1, 28, 28)).astype(np.float32)
        assert gan.discriminate(img).data.tobytes() == back.discriminate(img).data.tobytes()
        assert back.generator.step_count == 7

    def test_bytes_stable(self, gan):
        data = encode_checkpoint(capture(gan, {"a": 1}, 2, np.random.default_rng(0), {"note": "x"}))
        again = decode_checkpoint(data)
        assert encode_checkpoint(again) == data
        assert (again.epoch, again.config, again.extra) == (2, {"a": 1}, {"note": "x"})

    def test_rng_state(self):
        rng = np.random.default_rng(5)
        rng.normal(size=3)
        ckpt = decode_checkpoint(encode_checkpoint(capture(Lenet5Model(), {}, 0, rng)))
        np.testing.assert_array_equal(ckpt.restore_rng().normal(size=4), rng.normal(size=4))

    def test_no_temp_files_left(self, tmp_path):
        save_checkpoint(tmp_path / "l.aick", capture(Lenet5Model(), {}, 0))
        assert [p.name for p in tmp_path.iterdir()] == ["l.aick"]


@pytest.fixture(scope="module")
def data():
    return encode_checkpoint(capture(Lenet5Model(seed=1), {}, 1))


class TestErrors:
    def test_architecture_mismatch(self, data):
        with pytest.raises(CheckpointError, match="architecture"):
            decode_checkpoint(data, expected_arch="aivae")
        with pytest.raises(CheckpointError, match="architecture"):
            restore(AivaeganModel(), decode_checkpoint(data))

    def test_version_mismatch(self, data):
        body = bytearray(data[:-4])
        struct.pack_into("<H", body, 4, 99)
        with pytest.raises(CheckpointError, match="version"):
            decode_checkpoint(bytes(body) + struct.pack("<I", zlib.crc32(body)))

    def test_corrupted(self, data):
        bad = bytearray(data)
        bad[len(bad) // 2] ^= 0x10
        with pytest.raises(CheckpointError, match="checksum"):
            decode_checkpoint(bytes(bad))

    def test_truncated(self, data):
        with pytest.raises(CheckpointError):
            decode_checkpoint(data[: len(data) - 100])

    def test_magic(self, data):
        with pytest.raises(CheckpointError, match="magic"):
            decode_checkpoint(b"XXXX" + data[4:])

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(tmp_path / "nope.aick")

    def test_shape_mismatch_leaves_model_untouched(self):
        small = capture(AivaeganModel(latent_dim=8, seed=0), {"latent_dim": 8}, 0)
        target = AivaeganModel(seed=1)
        before = target.generator["enc.conv1.weight"].data.copy()
        with pytest.raises(CheckpointError):
            restore(target, small)
        np.testing.assert_array_equal(before, target.generator["enc.conv1.weight"].data)
