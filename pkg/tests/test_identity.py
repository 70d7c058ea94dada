import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy.stats import ks_2samp

from sider.data import synth_faces

from sider.identity import (EMBED_DIM, EnsembleConfig, arch_for_seed, calibrate_threshold, cos_sim, embed,
                            make_embedder, pair_similarities, threshold_from_impostors)


def test_architectures_differ_by_seed():
    archs = [arch_for_seed(s) for s in range(4)]
    assert len({tuple(sorted(a.items())) for a in archs}) == 4
    counts = {make_embedder(s).param_count() for s in range(4)}
    assert len(counts) == 4


def test_embeddings_are_unit_norm():
    e = make_embedder(0).eval()
    with torch.no_grad():
        v = embed(e, torch.rand(3, 3, 64, 64))
    assert v.shape == (3, EMBED_DIM)
    torch.testing.assert_close(v.norm(dim=1), torch.ones(3))
    with pytest.raises(ValueError):
        embed(e, torch.rand(3, 1, 64, 64))


def test_threshold_examples():
    grid = np.linspace(0, 0.99, 100)
    assert threshold_from_impostors(grid, 0.01) == pytest.approx(0.99)
    assert threshold_from_impostors(grid, 1.0) == pytest.approx(0.0)
    with pytest.raises(ValueError):
        threshold_from_impostors([], 0.01)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=400), st.floats(0.001, 1.0))
def test_threshold_is_highest_score_reaching_target_rate(sims, far):
    s = np.asarray(sims)
    tau = threshold_from_impostors(s, far)
    # brute force: the highest candidate whose acceptance count reaches far·n
    ok = [v for v in s if np.count_nonzero(s >= v) >= far * len(s) - 1e-9]
    assert tau == max(ok)


def test_pair_similarities_split_genuine_and_impostor():
    emb = np.eye(4)[[0, 0, 1, 2]]
    labels = np.array([7, 7, 8, 9])
    g, imp = pair_similarities(emb, labels)
    np.testing.assert_allclose(g, [1.0])
    assert len(imp) == 5 and np.all(imp == 0)


def test_calibration_needs_enough_pairs():
    e = make_embedder(0).eval()
    imgs = np.random.default_rng(0).random((6, 3, 32, 32)).astype(np.float32)
    with pytest.raises(ValueError, match="insufficient pairs"):
        calibrate_threshold(e, imgs, np.array([0, 0, 1, 1, 2, 2]))
    with pytest.raises(ValueError, match="insufficient pairs"):
        calibrate_threshold(e, imgs, np.zeros(6, dtype=np.int64))


def test_ensemble_loss_zero_on_source_and_weighted():
    torch.manual_seed(0)
    models = [make_embedder(s).eval() for s in range(3)]
    ens = EnsembleConfig(models).eval()
    x = torch.rand(2, 3, 32, 32)
    torch.testing.assert_close(ens.loss(x, x), torch.zeros(2), atol=1e-6, rtol=0)
    y = torch.rand(2, 3, 32, 32)
    per = torch.stack([1 - cos_sim(m(y), m(x)) for m in models])
    torch.testing.assert_close(ens.loss(y, x), per.mean(0), atol=1e-6, rtol=0)
    single = EnsembleConfig(models, [0, 1, 0])
    torch.testing.assert_close(single.loss(y, x), per[1], atol=1e-6, rtol=0)
    with pytest.raises(ValueError):
        EnsembleConfig(models, [0, 0, 0])
    with pytest.raises(ValueError):
        EnsembleConfig([])


def test_ensemble_loss_bounded():
    ens = EnsembleConfig([make_embedder(s).eval() for s in range(2)])
    x, y = torch.rand(4, 3, 32, 32), torch.rand(4, 3, 32, 32)
    loss = ens.loss(y, x)
    assert torch.all(loss >= -1e-6) and torch.all(loss <= 2 + 1e-6)


@pytest.mark.xfail(strict=True, reason="random conv features already separate synthetic identities: "
                   "per-identity colour statistics survive random projections, so KS p is far below 0.01")
def test_untrained_embedder_sims_indistinguishable():
    m = synth_faces(30, 4, 0)
    x, y = m.arrays("train")
    emb = embed(make_embedder(0), torch.from_numpy(x)).detach().numpy()
    genuine, impostor = pair_similarities(emb, y)
    assert ks_2samp(genuine, impostor).pvalue > 0.01
