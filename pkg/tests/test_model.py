import numpy as np
import pytest
import torch

from lpn.errors import ConfigError
from lpn.model import (
    LPN,
    GeoSample,
    ModelConfig,
    PartPooling,
    classify_part,
    embed,
    embed_images,
    extract_features,
    load_checkpoint,
    reference50_backbone,
    save_checkpoint,
)
from lpn.partition import PartitionSpec, build_assignment, partition_pool, pool_gradient


def _model(n=4, seed=0, **kw):
    torch.manual_seed(seed)
    return LPN(ModelConfig(num_classes=kw.pop("num_classes", 10), partition=PartitionSpec("square_ring", n), **kw)).eval()


def _image(seed=0, size=256):
    return np.random.default_rng(seed).random((size, size, 3), dtype=np.float32)


# --------------------------------------------------------------------------- config

def test_config_defaults():
    cfg = ModelConfig(num_classes=5)
    assert cfg.bottleneck_dim == 512 and cfg.dropout_rate == 0.5 and cfg.share_aerial_weights
    assert cfg.descriptor_dim == 2048
    assert cfg.ground_partition == PartitionSpec("row", 4)


@pytest.mark.parametrize("kw", [
    dict(num_classes=0),
    dict(num_classes=3, bottleneck_dim=0),
    dict(num_classes=3, dropout_rate=1.0),
    dict(num_classes=3, backbone="vgg"),
    dict(num_classes=3, input_size=250),
    dict(num_classes=3, input_size=64),  # 4x4 map cannot hold 4 rings
    dict(num_classes=3, ground_partition=PartitionSpec("row", 2)),
])
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        ModelConfig(**kw)


def test_config_dict_round_trip():
    cfg = ModelConfig(num_classes=7, partition=PartitionSpec("column", 3), share_aerial_weights=False,
                      platforms=(1, 2, 3), dropout_rate=0.25)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_branch_names():
    assert ModelConfig(num_classes=2).branch_of(1) == ModelConfig(num_classes=2).branch_of(2) == "aerial"
    cfg = ModelConfig(num_classes=2, share_aerial_weights=False, platforms=(1, 2, 3))
    assert [cfg.branch_of(j) for j in (1, 2, 3)] == ["satellite", "drone", "ground"]
    with pytest.raises(ValueError, match="has no branch"):
        ModelConfig(num_classes=2).branch_of(3)


# --------------------------------------------------------------------------- feature maps

def test_tiny_feature_map_shape():
    f = extract_features(GeoSample(_image(), 1), _model())
    assert f.shape == (16, 16, 64)


def test_reference50_feature_map_shape():
    torch.manual_seed(0)
    net = reference50_backbone().eval()
    with torch.no_grad():
        f = net(torch.rand(1, 3, 256, 256))
    assert tuple(f.shape) == (1, 2048, 16, 16)
    assert net.out_channels == 2048


def test_aerial_branches_share_weights():
    model = _model()
    assert list(model.backbones) == ["aerial"]
    img = _image(1)
    f1 = extract_features(GeoSample(img, 1), model)
    f2 = extract_features(GeoSample(img, 2), model)
    assert np.array_equal(f1, f2)


def test_unshared_branches_differ():
    model = _model(share_aerial_weights=False)
    assert sorted(model.backbones) == ["drone", "satellite"]
    img = _image(1)
    assert not np.array_equal(extract_features(GeoSample(img, 1), model),
                              extract_features(GeoSample(img, 2), model))


def test_ground_branch_uses_rows():
    model = _model(platforms=(1, 2, 3))
    assert sorted(model.backbones) == ["aerial", "ground"]
    assert model.pools["ground"].spec == PartitionSpec("row", 4)


def test_extract_features_errors():
    model = _model()
    with pytest.raises(ValueError, match="has no branch"):
        extract_features(GeoSample(_image(), 3), model)
    with pytest.raises(ValueError, match="incompatible"):
        extract_features(GeoSample(_image(size=250), 1), model)


def test_geosample_validation():
    with pytest.raises(ValueError):
        GeoSample(np.zeros((4, 4)), 1)
    with pytest.raises(ValueError):
        GeoSample(np.full((4, 4, 3), np.nan), 1)
    with pytest.raises(ValueError):
        GeoSample(np.zeros((4, 4, 3)), 5)


# --------------------------------------------------------------------------- pooling layer

def test_part_pooling_matches_numpy(rng):
    spec = PartitionSpec("square_ring", 4)
    f = rng.normal(size=(16, 16, 6))
    out = PartPooling(spec)(torch.from_numpy(f).permute(2, 0, 1)[None].double())
    assert np.allclose(out[0].numpy(), partition_pool(f, build_assignment(spec, 16, 16)), atol=1e-12)


def test_part_pooling_autograd_matches_pool_gradient(rng):
    spec = PartitionSpec("square_ring", 3)
    a = build_assignment(spec, 12, 12)
    f = rng.normal(size=(12, 12, 5))
    up = rng.normal(size=(3, 5))
    t = torch.from_numpy(f).permute(2, 0, 1)[None].double().requires_grad_(True)
    (PartPooling(spec)(t)[0] * torch.from_numpy(up)).sum().backward()
    grad = t.grad[0].permute(1, 2, 0).numpy()
    assert np.allclose(grad, pool_gradient(f, a, up), atol=1e-12)


# --------------------------------------------------------------------------- classifier and descriptor

def test_classify_part_shapes_and_determinism():
    model = _model(num_classes=13)
    g = np.random.default_rng(0).normal(size=64)
    z1, b1 = classify_part(g, 2, model)
    z2, b2 = classify_part(g, 2, model)
    assert z1.shape == (13,) and b1.shape == (512,)
    assert np.array_equal(z1, z2) and np.array_equal(b1, b2)


def test_classify_part_zero_input_is_finite():
    model = _model()
    z, b = classify_part(np.zeros(64), 1, model)
    bn = model.classifiers["part1"].bn
    # eval-mode BN of the FC bias (zero at init) with fresh running stats
    expected = (model.classifiers["part1"].fc.bias.detach() - bn.running_mean) / torch.sqrt(bn.running_var + bn.eps)
    expected = expected * bn.weight.detach() + bn.bias.detach()
    assert np.all(np.isfinite(z))
    assert np.allclose(b, expected.numpy(), atol=1e-6)


@pytest.mark.parametrize("index", [0, 5, -1])
def test_classify_part_rejects_index(index):
    with pytest.raises(ValueError, match="part_index"):
        classify_part(np.zeros(64), index, _model())


@pytest.mark.parametrize("n,length", [(4, 2048), (1, 512), (2, 1024)])
def test_descriptor_length(n, length):
    d = embed(GeoSample(_image(), 2), _model(n=n))
    assert d.shape == (length,)


def test_descriptor_is_part_ordered_bottleneck():
    model = _model()
    img = _image(2)
    d = embed(GeoSample(img, 2), model)
    with torch.no_grad():
        logits, b = model(torch.from_numpy(img).permute(2, 0, 1)[None], 2)
    assert len(logits) == 4 and logits[0].shape == (1, 10)
    assert np.allclose(d, b[0].reshape(-1).numpy(), atol=1e-6)
    assert np.array_equal(d, embed(GeoSample(img, 2), model))


def test_embed_images_batches_consistently():
    model = _model()
    imgs = np.stack([_image(s) for s in range(5)])
    full = embed_images(model, imgs, 1, batch_size=5)
    split = embed_images(model, imgs, 1, batch_size=2)
    assert full.shape == (5, 4, 512)
    assert np.allclose(full, split, atol=1e-5)


def test_model_init_is_seeded():
    a, b = _model(seed=3), _model(seed=3)
    for (ka, va), (kb, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert ka == kb and torch.equal(va, vb)


# --------------------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip(tmp_path):
    model = _model(n=2, num_classes=6, share_aerial_weights=False, platforms=(1, 2, 3))
    save_checkpoint(tmp_path / "m.pt", model, {"epoch": 3})
    loaded, extra = load_checkpoint(tmp_path / "m.pt")
    assert extra == {"epoch": 3}
    assert loaded.cfg == model.cfg
    img = _image(4)
    assert np.array_equal(embed(GeoSample(img, 3), loaded), embed(GeoSample(img, 3), model))


def test_checkpoint_key_names(tmp_path):
    keys = set(_model(n=2).state_dict())
    assert "backbones.aerial.block1.conv.weight" in keys
    assert "backbones.aerial.block4.bn.running_var" in keys
    for i in (1, 2):
        for name in ("fc.weight", "fc.bias", "bn.weight", "bn.running_mean", "cls.weight", "cls.bias"):
            assert f"classifiers.part{i}.{name}" in keys
    assert not any(k.startswith("pixel_") for k in keys)


def test_checkpoint_rejects_foreign_file(tmp_path):
    torch.save({"state_dict": {}}, tmp_path / "x.pt")
    with pytest.raises(ConfigError):
        load_checkpoint(tmp_path / "x.pt")
