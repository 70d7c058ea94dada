import struct

import numpy as np
import pytest
import torch

from sider.checkpoint import (FORMAT_VERSION, MAGIC, CheckpointError, decode_state, encode_state, file_sha256,
                              load_module, read_checkpoint, save_module)
from sider.crm import CRM
from sider.diffusion import Autoencoder, Denoiser
from sider.identity import Embedder, make_embedder

REGISTRY = {"denoiser": Denoiser, "embedder": Embedder, "crm": CRM, "autoencoder": Autoencoder}


def test_layout_is_documented_header_then_float_blocks():
    state = {"w": torch.arange(6, dtype=torch.float32).reshape(2, 3), "b": torch.tensor([7.0])}
    data = encode_state(state, "toy", {"n": 1})
    assert data[:8] == MAGIC
    version, hlen = struct.unpack("<II", data[8:16])
    assert version == FORMAT_VERSION
    body = np.frombuffer(data[16 + hlen:], dtype="<f4")
    np.testing.assert_array_equal(body, [0, 1, 2, 3, 4, 5, 7])
    header, back = decode_state(data)
    assert header["kind"] == "toy" and header["param_count"] == 7
    assert torch.equal(back["w"], state["w"])


@pytest.mark.parametrize("kind,module", [
    ("denoiser", Denoiser(4, 16, 49, 20)),
    ("embedder", make_embedder(1)),
    ("crm", CRM(n_blocks=1, hidden=8)),
    ("autoencoder", Autoencoder("conv", 4, 8)),
])
def test_module_roundtrip_bitexact(tmp_path, kind, module):
    digest = save_module(tmp_path / "m.sck", module, kind, {"note": "x"})
    assert digest == file_sha256(tmp_path / "m.sck")
    back, header = load_module(tmp_path / "m.sck", REGISTRY)
    assert header["meta"] == {"note": "x"}
    for (k, a), (_, b) in zip(module.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a.float(), b.float()), k


def test_same_weights_same_bytes(tmp_path):
    torch.manual_seed(0)
    a = Denoiser(4, 16, 49, 20)
    torch.manual_seed(0)
    b = Denoiser(4, 16, 49, 20)
    assert save_module(tmp_path / "a.sck", a, "denoiser") == save_module(tmp_path / "b.sck", b, "denoiser")


def test_corruption_detected(tmp_path):
    save_module(tmp_path / "m.sck", Denoiser(4, 8, 49, 20), "denoiser")
    data = (tmp_path / "m.sck").read_bytes()
    with pytest.raises(CheckpointError, match="magic"):
        decode_state(b"XXXXXXXX" + data[8:])
    with pytest.raises(CheckpointError, match="version"):
        decode_state(data[:8] + struct.pack("<I", 99) + data[12:])
    with pytest.raises(CheckpointError, match="length"):
        decode_state(data[:-4])
    (tmp_path / "k.sck").write_bytes(encode_state({}, "mystery", {}))
    with pytest.raises(CheckpointError, match="unknown"):
        load_module(tmp_path / "k.sck", REGISTRY)


def test_atomic_write_leaves_no_temp_files(tmp_path):
    save_module(tmp_path / "m.sck", Denoiser(4, 8, 49, 20), "denoiser")
    assert [p.name for p in tmp_path.iterdir()] == ["m.sck"]
    header, _ = read_checkpoint(tmp_path / "m.sck")
    assert header["arch"]["width"] == 8
