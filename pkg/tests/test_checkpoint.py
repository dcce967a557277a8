import pytest
import torch

from patchbook.checkpoint import (MAGIC, CheckpointError, decode_payload, encode_payload, read_checkpoint,
                                  write_checkpoint)


def payload():
    g = torch.Generator().manual_seed(0)
    return {
        "params": {"w": torch.randn(3, 4, generator=g), "b": torch.zeros(4, dtype=torch.float64)},
        "optimizer": {"state": {0: {"step": torch.tensor(3.0)}, 1: {}}, "groups": [{"lr": 0.1, "params": [0, 1]}]},
        "shape": (2, 3),
        "flags": torch.tensor([True, False]),
        "rng": torch.arange(5, dtype=torch.uint8),
        "name": "x", "epoch": 2, "none": None,
    }


def assert_same(a, b):
    if torch.is_tensor(a):
        assert torch.is_tensor(b) and a.dtype == b.dtype and torch.equal(a, b)
    elif isinstance(a, dict):
        assert a.keys() == b.keys()
        for k in a:
            assert_same(a[k], b[k])
    elif isinstance(a, (list, tuple)):
        assert type(a) is type(b) and len(a) == len(b)
        for x, y in zip(a, b):
            assert_same(x, y)
    else:
        assert a == b


class TestEncoding:
    def test_round_trip(self):
        p = payload()
        assert_same(decode_payload(encode_payload(p)), p)

    def test_insertion_order_irrelevant(self):
        p = payload()
        q = dict(reversed(list(p.items())))
        q["params"] = {"b": p["params"]["b"], "w": p["params"]["w"]}
        assert encode_payload(p) == encode_payload(q)

    def test_unsupported(self):
        with pytest.raises(CheckpointError):
            encode_payload({"x": object()})
        with pytest.raises(CheckpointError):
            encode_payload({"x": torch.zeros(2, dtype=torch.float16)})


class TestFiles:
    def test_write_read(self, tmp_path):
        path = write_checkpoint(payload(), tmp_path / "sub" / "c.pt")
        assert path.read_bytes().startswith(MAGIC)
        assert_same(read_checkpoint(path), payload())
        assert not list(tmp_path.glob("sub/*.tmp"))

    def test_bit_flip_detected(self, tmp_path):
        path = write_checkpoint(payload(), tmp_path / "c.pt")
        raw = bytearray(path.read_bytes())
        raw[-3] ^= 0x01
        path.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            read_checkpoint(path)

    def test_wrong_magic_and_version(self, tmp_path):
        bad = tmp_path / "bad.pt"
        bad.write_bytes(b"hello\nworld")
        with pytest.raises(CheckpointError, match="not a checkpoint"):
            read_checkpoint(bad)
        good = write_checkpoint(payload(), tmp_path / "c.pt").read_bytes()
        bad.write_bytes(good.replace(MAGIC + b" 2", MAGIC + b" 9", 1))
        with pytest.raises(CheckpointError, match="version"):
            read_checkpoint(bad)
