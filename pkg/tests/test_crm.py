import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from sider.crm import (CRM, BundleError, CRMLossWeights, ProtectedBundle, ProtectionKey, RecoveryPath,
                       commitment, key_expand, protect, randomize_, recover, sidecar_path, tiles, train_crm,
                       ungated_deep_inversion, verify_commitment)
from sider.wavelet import dwt_stacked, idwt_stacked


def _images(n, size=32, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((size, size, 3)).astype(np.float32) for _ in range(n)]


def test_key_basics():
    k = ProtectionKey.generate()
    assert len(k.bits) == 16 and len(k.key_id) == 16
    assert k.hex() not in repr(k)
    assert ProtectionKey.from_hex(k.hex(), k.key_id) == k
    with pytest.raises(ValueError):
        ProtectionKey(b"short", b"salt")
    with pytest.raises(ValueError, match="hex"):
        ProtectionKey.from_hex("zz", b"s")


def test_commitment_binds_key_and_salt():
    k = ProtectionKey(bytes(16), b"a" * 16)
    c = commitment(k)
    assert verify_commitment(k, c)
    assert not verify_commitment(k.with_salt(b"b" * 16), c)
    assert not verify_commitment(ProtectionKey(bytes(15) + b"\x01", b"a" * 16), c)


def test_key_expand_deterministic_and_gaussian():
    k = ProtectionKey(bytes(range(16)), b"s" * 16)
    a = key_expand(k, (4, 64, 64))
    np.testing.assert_array_equal(a, key_expand(k, (4, 64, 64)))
    assert abs(a.mean()) < 0.03 and abs(a.std() - 1) < 0.03
    b = key_expand(k.with_salt(b"t" * 16), (4, 64, 64))
    assert np.corrcoef(a.ravel(), b.ravel())[0, 1] < 0.05


def test_coupling_identity_at_init():
    crm = CRM(n_blocks=2, hidden=8)
    x = torch.randn(1, 12, 8, 8)
    g = torch.randn(1, 12, 8, 8)
    y, r = crm.shallow_embed(x, g)
    assert torch.equal(y, x) and torch.equal(r, g)


def test_bijective_for_random_parameters():
    cover, decoy, secret = (torch.from_numpy(a.transpose(2, 0, 1))[None] for a in _images(3))
    key = ProtectionKey.generate()
    for seed in range(10):
        crm = randomize_(CRM(n_blocks=2, hidden=16), seed)
        k = crm.key_tensor(key, (16, 16))
        inter, r_deep = crm.deep_embed(dwt_stacked(cover), dwt_stacked(secret), k)
        prot, r_shallow = crm.shallow_embed(inter, dwt_stacked(decoy))
        with torch.no_grad():
            d_rec, s_rec = crm.recover_images(idwt_stacked(prot), k, r_shallow, r_deep)
            inter_back, _ = crm.shallow_invert(prot, r_shallow)
            c_rec, _ = crm.deep_invert(inter_back, k, r_deep)
        assert float((d_rec - decoy).abs().max()) < 1e-4
        assert float((s_rec - secret).abs().max()) < 1e-4
        assert float((idwt_stacked(c_rec) - cover).abs().max()) < 1e-4


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31 - 1), st.floats(0.2, 1.5))
def test_coupling_block_inverse_property(seed, gain):
    crm = randomize_(CRM(n_blocks=1, hidden=8), seed, gain)
    gen = torch.Generator().manual_seed(seed)
    a, b = torch.randn(2, 12, 4, 4, generator=gen), torch.randn(2, 12, 4, 4, generator=gen)
    k = torch.randn(2, 4, 4, 4, generator=gen)
    with torch.no_grad():
        y1, y2 = crm.deep.blocks[0](a, b, k)
        x1, x2 = crm.deep.blocks[0].inverse(y1, y2, k)
    torch.testing.assert_close(x1, a, atol=1e-4, rtol=1e-4)
    torch.testing.assert_close(x2, b, atol=1e-4, rtol=1e-4)


def test_gate_paths_and_wrong_key_matches_no_key():
    crm = randomize_(CRM(n_blocks=1, hidden=8), 0, 0.5)
    crm.trained.fill_(1.0)
    cover, decoy, secret = _images(3)
    key = ProtectionKey.generate()
    bundle = protect(crm, cover, decoy, secret, key, aux_seed=11)
    trace = []
    none_out, path = recover(crm, bundle, None, trace)
    assert path is RecoveryPath.UNAUTHORIZED and trace == ["shallow_invert"]
    trace = []
    _, path = recover(crm, bundle, key, trace)
    assert path is RecoveryPath.AUTHORIZED and trace == ["shallow_invert", "deep_invert"]
    _, path = recover(crm, bundle, key.bits)
    assert path is RecoveryPath.AUTHORIZED
    rng = np.random.default_rng(1)
    for _ in range(20):
        out, path = recover(crm, bundle, rng.bytes(16))
        assert path is RecoveryPath.UNAUTHORIZED
        assert out.tobytes() == none_out.tobytes()
    assert recover(crm, bundle, b"short")[1] is RecoveryPath.UNAUTHORIZED


def test_protect_warns_when_untrained(caplog):
    cover, decoy, secret = _images(3, 16)
    protect(CRM(n_blocks=1, hidden=4), cover, decoy, secret, ProtectionKey.generate(), aux_seed=0)
    assert "untrained" in caplog.text
    with pytest.raises(ValueError, match="shape"):
        protect(CRM(n_blocks=1, hidden=4), cover, decoy[:8], secret, ProtectionKey.generate())


def test_bundle_roundtrip_and_corruption(tmp_path):
    crm = CRM(n_blocks=1, hidden=4)
    key = ProtectionKey.generate()
    cover, decoy, secret = _images(3, 16)
    b = protect(crm, cover, decoy, secret, key, aux_seed=5)
    b.save(tmp_path / "p.png")
    back = ProtectedBundle.load(tmp_path / "p.png")
    np.testing.assert_array_equal(back.x_hat, b.x_hat)
    assert (back.key_salt, back.commitment, back.aux_seed) == (b.key_salt, b.commitment, 5)
    side = sidecar_path(tmp_path / "p.png")
    assert key.hex() not in side.read_text()
    doc = json.loads(side.read_text())
    for bad in ({**doc, "commitment": "00"}, {**doc, "format_version": 9}, {"aux_seed": 1}):
        side.write_text(json.dumps(bad))
        with pytest.raises(BundleError):
            ProtectedBundle.load(tmp_path / "p.png")
    side.write_text("{not json")
    with pytest.raises(BundleError):
        ProtectedBundle.load(tmp_path / "p.png")
    side.unlink()
    with pytest.raises(BundleError, match="missing"):
        ProtectedBundle.load(tmp_path / "p.png")


def test_training_reduces_every_recovery_term():
    rng = np.random.default_rng(0)
    base = rng.random((48, 3, 4, 4)).astype(np.float32)
    smooth = lambda a: torch.nn.functional.interpolate(torch.from_numpy(a), size=16, mode="bilinear").numpy()  # noqa: E731
    covers, decoys, secrets_ = smooth(base), smooth(np.roll(base, 1, 0)), smooth(np.roll(base, 2, 0))
    history = []
    crm = train_crm(covers, decoys, secrets_, epochs=8, n_blocks=2, hidden=16, batch_size=8, lr=3e-3,
                    history=history)
    assert float(crm.trained) == 1.0
    first = {k: np.mean([h[k] for h in history[:3]]) for k in history[0]}
    last = {k: np.mean([h[k] for h in history[-3:]]) for k in history[0]}
    for term in ("loss", "decoy", "secret"):
        assert last[term] < first[term], term


def test_zero_epochs_returns_untrained():
    a = np.zeros((4, 3, 8, 8), np.float32)
    crm = train_crm(a, a, a, epochs=0)
    assert float(crm.trained) == 0.0


def test_wrong_key_inversion_error_dominates_untrained():
    cover, secret = (torch.from_numpy(a.transpose(2, 0, 1))[None] for a in _images(2))
    ratios = []
    for trial in range(20):
        crm = randomize_(CRM(n_blocks=2, hidden=16), trial)
        k, k_wrong = (crm.key_tensor(ProtectionKey.generate(), (16, 16)) for _ in range(2))
        with torch.no_grad():
            inter, r = crm.deep_embed(dwt_stacked(cover), dwt_stacked(secret), k)
            _, s_ok = crm.deep_invert(inter, k, r)
            _, s_bad = crm.deep_invert(inter, k_wrong, r)
        ok = float((s_ok - dwt_stacked(secret)).abs().mean())
        bad = float((s_bad - dwt_stacked(secret)).abs().mean())
        ratios.append(bad / max(ok, 1e-12))
    assert min(ratios) >= 10


def test_tiles_partition_images():
    x = np.arange(2 * 3 * 8 * 8, dtype=np.float32).reshape(2, 3, 8, 8)
    t = tiles(x, 4)
    assert t.shape == (8, 3, 4, 4)
    assert np.array_equal(np.sort(t.ravel()), np.sort(x.ravel()))
    np.testing.assert_array_equal(t[0], x[0, :, :4, :4])
    with pytest.raises(ValueError):
        tiles(x, 3)
