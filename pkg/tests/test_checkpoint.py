import numpy as np
import pytest

from conftest import toy_config
from desk_embed.encoder import Encoder
from desk_embed.trainer.checkpoint import MANIFEST, CheckpointError, load_checkpoint, save_checkpoint


@pytest.fixture
def saved(tmp_path):
    enc = Encoder(toy_config(), seed=9)
    for t in enc.weights.values():
        t.data = t.data + np.random.default_rng(1).standard_normal(t.data.shape) * 1e-3
    save_checkpoint(tmp_path, enc, {"stage": "mlm", "step": 4})
    return tmp_path, enc


def _edit_manifest(path, old, new):
    m = path / MANIFEST
    text = m.read_text()
    assert old in text
    m.write_text(text.replace(old, new, 1))


class TestRoundTrip:
    def test_bitwise(self, saved):
        path, enc = saved
        loaded, meta = load_checkpoint(path)
        assert loaded.config == enc.config
        assert meta == {"stage": "mlm", "step": 4}
        for k, t in enc.weights.items():
            assert loaded.weights[k].data.tobytes() == t.data.tobytes()

    def test_special_values_survive(self, tmp_path):
        enc = Encoder(toy_config(), seed=0)
        enc.weights["mlm.bias"].data[:3] = [-0.0, 5e-324, 1.7976931348623157e308]
        save_checkpoint(tmp_path, enc)
        loaded, _ = load_checkpoint(tmp_path)
        assert loaded.weights["mlm.bias"].data.tobytes() == enc.weights["mlm.bias"].data.tobytes()


class TestCorruption:
    def test_truncated_blob(self, saved):
        path, _ = saved
        blob = path / "layers.0.attn.wqkv.f64"
        blob.write_bytes(blob.read_bytes()[:-8])
        with pytest.raises(CheckpointError, match="truncated"):
            load_checkpoint(path)

    def test_trailing_bytes(self, saved):
        path, _ = saved
        blob = path / "final_norm.bias.f64"
        blob.write_bytes(blob.read_bytes() + b"\x00" * 8)
        with pytest.raises(CheckpointError, match="trailing"):
            load_checkpoint(path)

    def test_flipped_byte(self, saved):
        path, _ = saved
        blob = path / "embeddings.word.f64"
        raw = bytearray(blob.read_bytes())
        raw[100] ^= 0xFF
        blob.write_bytes(bytes(raw))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_shape_edit_names_tensor(self, saved):
        path, _ = saved
        _edit_manifest(path, "tensor.layers.1.ffn.w_up.shape = 16,32", "tensor.layers.1.ffn.w_up.shape = 32,16")
        with pytest.raises(CheckpointError, match="layers.1.ffn.w_up"):
            load_checkpoint(path)

    def test_version_mismatch(self, saved):
        path, _ = saved
        _edit_manifest(path, "version = 1", "version = 2")
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_missing_blob(self, saved):
        path, _ = saved
        (path / "mlm.bias.f64").unlink()
        with pytest.raises(CheckpointError, match="mlm.bias"):
            load_checkpoint(path)

    def test_missing_tensor_entry(self, saved):
        path, _ = saved
        m = path / MANIFEST
        m.write_text("\n".join(l for l in m.read_text().splitlines() if not l.startswith("tensor.mlm.bias.")))
        with pytest.raises(CheckpointError, match="mismatch"):
            load_checkpoint(path)

    def test_no_manifest(self, tmp_path):
        with pytest.raises(CheckpointError, match="manifest"):
            load_checkpoint(tmp_path)
