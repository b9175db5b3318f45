import io
import struct

import pytest
import torch

from shotcast import container
from shotcast.harness.checks import toy_model


def test_roundtrip_preserves_dtypes_and_meta():
    tensors = {"a": torch.randn(2, 3), "b": torch.randn(4, dtype=torch.float64),
               "c": torch.arange(5), "d": torch.tensor([1, 2], dtype=torch.uint8), "e": torch.zeros(0, 2)}
    blob = container.dumps(b"TEST", {"x": [1, 2], "s": "hi"}, tensors)
    meta, back = container.loads(blob, b"TEST")
    assert meta == {"x": [1, 2], "s": "hi"}
    for k, t in tensors.items():
        assert back[k].dtype == (torch.int64 if k == "c" else t.dtype)
        assert torch.equal(back[k], t)


def test_preamble_layout():
    blob = container.dumps(b"SCKP", {}, {})
    magic, version, hlen = struct.unpack_from("<4sIQ", blob)
    assert magic == b"SCKP" and version == container.FORMAT_VERSION and len(blob) == 16 + hlen


def test_rejections():
    blob = container.dumps(b"SCKP", {}, {"w": torch.ones(3)})
    with pytest.raises(container.ContainerError):
        container.loads(blob, b"SCSN")
    with pytest.raises(container.ContainerError):
        container.loads(blob[:8], b"SCKP")
    with pytest.raises(container.ContainerError):
        container.loads(blob[:-4], b"SCKP")
    newer = blob[:4] + struct.pack("<I", 99) + blob[8:]
    with pytest.raises(container.ContainerError):
        container.loads(newer, b"SCKP")
    garbled = blob[:16] + b"#" + blob[17:]
    with pytest.raises(container.ContainerError):
        container.loads(garbled, b"SCKP")
    with pytest.raises(container.ContainerError):
        container.dumps(b"SCKP", {}, {"z": torch.zeros(2, dtype=torch.complex64)})


def test_checkpoint_roundtrip(tmp_path):
    m = toy_model(seed=3)
    path = tmp_path / "m.ckpt"
    container.save_checkpoint(m, path, {"note": "x"})
    back, meta = container.load_checkpoint(path)
    assert meta["note"] == "x"
    assert container.parameter_hash(back) == container.parameter_hash(m)
    buf = io.BytesIO()
    container.save_checkpoint(m, buf)
    back2, _ = container.load_checkpoint(buf.getvalue())
    assert container.parameter_hash(back2) == container.parameter_hash(m)


def test_checkpoint_config_mismatch(tmp_path):
    m = toy_model(seed=0)
    meta = {"config": toy_model(layers=3).config.to_dict()}
    blob = container.dumps(container.CHECKPOINT_MAGIC, meta, dict(m.state_dict()), force_f32=True)
    with pytest.raises(container.ContainerError):
        container.load_checkpoint(blob)


def test_parameter_hash_sensitivity():
    a, b = toy_model(seed=0), toy_model(seed=0)
    assert container.parameter_hash(a) == container.parameter_hash(b)
    with torch.no_grad():
        next(b.parameters())[0].add_(1e-6)
    assert container.parameter_hash(a) != container.parameter_hash(b)
