import pytest
import torch

from spectralx import checkpoint as C
from spectralx.model import Variant, build
from spectralx.profiles import DESK


def test_round_trip(tmp_path):
    model = build(DESK, Variant(), stage=2)
    C.save(model, tmp_path / "w.spxw", {"note": "x"})
    tensors, meta = C.load(tmp_path / "w.spxw")
    assert meta == {"note": "x"}
    other = build(DESK, Variant(), stage=2)
    C.load_into(other, tensors)
    for (n, a), (_, b) in zip(model.state_dict().items(), other.state_dict().items()):
        assert torch.equal(a, b), n


def test_corruption_detected():
    data = bytearray(C.encode_weights({"a": torch.ones(3)}))
    data[-40] ^= 1
    with pytest.raises(C.CheckpointError):
        C.decode_weights(bytes(data))


def test_bad_magic_and_truncation():
    data = C.encode_weights({"a": torch.ones(3)})
    with pytest.raises(C.CheckpointError):
        C.decode_weights(b"XXXX" + data[4:])
    with pytest.raises(C.CheckpointError):
        C.decode_weights(data[:10])


def test_shape_mismatch():
    model = build(DESK, Variant(), stage=2)
    with pytest.raises(C.CheckpointError):
        C.load_into(model, {"seg_head.cls.bias": torch.zeros(9)})


def test_backbone_import(tmp_path):
    src = build(DESK, Variant.ablation("freeze"), stage=2)
    C.save(src, tmp_path / "bb.spxw")
    dst = build(DESK, Variant(), stage=2)
    loaded = C.load_backbone_weights(dst, tmp_path / "bb.spxw")
    assert loaded and all(n.startswith("encoder.blocks.") for n in loaded)
    assert torch.equal(dst.encoder.blocks[0].attn.qkv.weight, src.encoder.blocks[0].attn.qkv.weight)
