import numpy as np
import pytest

from pcsod import autodiff as ad
from pcsod.autodiff import Tensor
from pcsod.data import encode_input, generate_scene, random_recipe
from pcsod.geometry import knn_indices
from pcsod.model import (
    MODEL_KEYS,
    ModelConfig,
    PointPerceptionBlock,
    PpbConfig,
    SaliencyNet,
    level_sizes,
    plan_geometry,
    relative_embedding_input,
    with_reduction,
)

DESK = ModelConfig(k_enc=16, level_dims=(16, 32, 64, 128), fab_dims=(64, 32, 32), spb_dim=32, head_dim=16)


@pytest.fixture(scope="module")
def full_forward():
    view = generate_scene(random_recipe(0), 4096)
    model = SaliencyNet(ModelConfig(), seed=0)
    feats = encode_input(view).features
    return model, feats, model.forward_block(feats)


def test_level_sizes():
    assert level_sizes(4096) == [1024, 256, 64, 16]
    assert level_sizes(256)[-1] == 1
    with pytest.raises(ValueError, match="divisible by 256"):
        level_sizes(1000)


def test_full_shapes(full_forward):
    _, _, out = full_forward
    assert [lv.shape[1:] for lv in out.levels] == [(1024, 64), (256, 128), (64, 256), (16, 512)]
    assert out.f_c.shape == (1, 1024, 128)
    assert out.f_s.shape == (1, 16, 512)
    assert out.f_m.shape == (1, 1024, 128)
    assert out.logits.shape == (1, 4096, 2)


def test_probabilities_valid(full_forward):
    _, _, out = full_forward
    p = out.probabilities
    assert p.shape == (1, 4096)
    assert (p >= 0).all() and (p <= 1).all()
    z = out.logits.data.astype(np.float64)
    both = ad.softmax(Tensor(z), axis=-1).data
    np.testing.assert_allclose(both.sum(axis=-1), 1.0, atol=1e-9)
    np.testing.assert_allclose(both[..., 1], p, atol=1e-9)


def test_parameter_count_and_dtype(full_forward):
    model, _, _ = full_forward
    assert model.dtype == np.float32
    assert all(t.dtype == np.float32 for t in model.named_parameters().values())
    assert 5_000_000 < model.num_parameters() < 7_000_000


def test_geometry_plan_tables():
    rng = np.random.default_rng(1)
    geo = plan_geometry(rng.uniform(size=(2, 4096, 3)), ModelConfig())
    assert [p.shape[1] for p in geo.positions] == [4096, 1024, 256, 64, 16]
    assert [g.shape[1:] for g in geo.enc_group] == [(1024, 32), (256, 32), (64, 32), (16, 32)]
    assert [g.shape[-1] for g in geo.ppb_sem] == [1, 4, 9, 16]
    assert [g.shape[-1] for g in geo.ppb_ms] == [1, 9, 25, 49]
    assert geo.spb_sem[0].shape == (2, 4096, 3) and geo.spb_ms[0].shape == (2, 4096, 3)
    # the k=1 branch groups every point with itself
    np.testing.assert_array_equal(geo.ppb_sem[0][..., 0], np.tile(np.arange(16), (2, 1)))


def test_geometry_plan_rejects_small_blocks():
    with pytest.raises(ValueError, match="semantics PPB needs 16 neighbors"):
        plan_geometry(np.random.default_rng(0).uniform(size=(1, 1024, 3)), ModelConfig())


def test_relative_embedding_examples():
    e = relative_embedding_input(np.zeros(3), np.array([[1.0, 0, 0]]))
    assert e.tolist() == [[0, 0, 0, 1, 0, 0, -1, 0, 0, 1]]
    c = np.array([0.3, -2.0, 1.0])
    e = relative_embedding_input(c, c[None])
    assert e[0, 6:].tolist() == [0, 0, 0, 0]


def test_relative_terms_translation_invariant():
    rng = np.random.default_rng(2)
    c, nb = rng.normal(size=(5, 3)), rng.normal(size=(5, 4, 3))
    shift = np.array([10.0, -3.0, 7.5])
    a = relative_embedding_input(c, nb)
    b = relative_embedding_input(c + shift, nb + shift)
    np.testing.assert_allclose(a[..., 6:], b[..., 6:], atol=1e-12)
    assert not np.allclose(a[..., :6], b[..., :6])


@pytest.mark.parametrize("K", [(1, 2, 3, 4), (1, 4, 9, 16), (2, 5, 6, 30)])
def test_ppb_keeps_width(K):
    rng = np.random.default_rng(3)
    pos = rng.uniform(size=(1, 40, 3))
    groups = [knn_indices(pos[0], pos[0], k)[0][None] for k in K]
    block = PointPerceptionBlock(12, PpbConfig(K), "mean_max", rng)
    out = block(Tensor(rng.normal(size=(1, 40, 12)).astype(np.float32)), pos, groups)
    assert out.shape == (1, 40, 12)


def test_ppb_config_validation():
    with pytest.raises(ValueError, match="strictly increasing"):
        PpbConfig((1, 4, 4, 9))
    with pytest.raises(ValueError):
        PpbConfig((1, 4, 9))


def test_config_text_round_trip():
    cfg = with_reduction(DESK, "attentive")
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    assert tuple(k for k, _ in cfg.as_items()) == MODEL_KEYS
    with pytest.raises(KeyError, match="missing key 'head_dim'"):
        ModelConfig.from_text(cfg.to_text().replace("head_dim=16\n", ""))
    with pytest.raises(ValueError, match="reduction"):
        with_reduction(DESK, "sum")


def test_every_parameter_receives_gradient():
    for reduction in ("mean_max", "attentive"):
        rng = np.random.default_rng(4)
        model = SaliencyNet(with_reduction(ModelConfig(), reduction), seed=1)
        feats = np.stack([encode_input(generate_scene(random_recipe(rng), 4096)).features for _ in range(2)])
        labels = rng.integers(0, 2, (2, 4096))
        out = model(feats, plan_geometry(feats[..., :3], model.cfg))
        ad.cross_entropy(out.logits, labels).backward()
        dead = [n for n, p in model.named_parameters().items() if p.grad is None or not np.any(p.grad)]
        # attention over a single neighbor is constant, so its scorer is unused
        expected = [] if reduction == "mean_max" else [
            "ppb_semantics.branches.0.attention.weight", "ppb_multiscale.branches.0.attention.weight"]
        assert sorted(dead) == sorted(expected)


def test_forward_is_permutation_equivariant():
    rng = np.random.default_rng(5)
    model = SaliencyNet(DESK, seed=2)
    for mode in ("train", "eval"):
        getattr(model, mode)()
        feats = encode_input(generate_scene(random_recipe(rng), 4096)).features
        perm = rng.permutation(4096)
        a = model.forward_block(feats).logits.data[0]
        b = model.forward_block(feats[perm]).logits.data[0]
        assert np.abs(a[perm] - b).max() <= 1e-5


def test_predict_leaves_no_graph_and_no_stat_updates():
    model = SaliencyNet(DESK, seed=3).eval()
    feats = encode_input(generate_scene(random_recipe(6), 4096)).features
    before = {k: v.copy() for k, v in model.state_dict().items()}
    p = model.predict(feats)
    assert p.shape == (1, 4096)
    after = model.state_dict()
    assert all(np.array_equal(before[k], after[k]) for k in before)
