import pytest
import torch

from taskneurons.engine import forward
from taskneurons.errors import IntegrityError, MissingArtifact
from taskneurons.weights import file_model_hash, load_weights, model_hash, read_header, save_weights


def test_roundtrip_preserves_logits_and_hash(tiny_model, tmp_path):
    h = save_weights(tiny_model, tmp_path / "w.tnw", {"note": "x"})
    model, header = load_weights(tmp_path / "w.tnw")
    assert header["model_hash"] == h == model_hash(tiny_model) == file_model_hash(tmp_path / "w.tnw")
    assert header["meta"] == {"note": "x"}
    assert forward(model, [2, 3, 4]).tobytes() == forward(tiny_model, [2, 3, 4]).tobytes()


def test_meta_does_not_change_model_hash(tiny_model, tmp_path):
    a = save_weights(tiny_model, tmp_path / "a.tnw", {"run": 1})
    b = save_weights(tiny_model, tmp_path / "b.tnw", {"run": 2})
    assert a == b
    with torch.no_grad():
        tiny_model.unembed.bias[0] += 1
    assert save_weights(tiny_model, tmp_path / "c.tnw") != a


def test_corruption_detected(tiny_model, tmp_path):
    p = tmp_path / "w.tnw"
    save_weights(tiny_model, p)
    raw = bytearray(p.read_bytes())
    raw[-3] ^= 0xFF
    p.write_bytes(bytes(raw))
    with pytest.raises(IntegrityError):
        load_weights(p)
    p.write_bytes(b"not a weight file at all")
    with pytest.raises(IntegrityError):
        read_header(p)


def test_missing_file(tmp_path):
    with pytest.raises(MissingArtifact):
        load_weights(tmp_path / "nope.tnw")
