import numpy as np
import pytest

from mrae.backbone import Backbone, BackboneConfig, backbone_forward, random_level, select_level
from mrae.tensor import ShapeError, Tensor, tsum


def _image(n=1, size=64, seed=0):
    return Tensor(np.random.default_rng(seed).uniform(0, 1, (n, 3, size, size)))


def test_toy_shapes():
    levels = Backbone(BackboneConfig())(_image())
    assert [f.shape for f in levels] == [(1, 16, 16, 16), (1, 32, 8, 8), (1, 64, 4, 4)]


def test_wide_channels():
    levels = Backbone(BackboneConfig.wide())(_image())
    assert [f.shape[1] for f in levels] == [256, 512, 1024]
    assert [f.shape[2] for f in levels] == [16, 8, 4]


def test_zero_image_gives_zero_features():
    levels = Backbone(BackboneConfig())(Tensor(np.zeros((2, 3, 32, 32))))
    for f in levels:
        assert not f.data.any()


def test_rejects_bad_input():
    bb = Backbone(BackboneConfig())
    with pytest.raises(ShapeError):
        backbone_forward(Tensor(np.zeros((1, 3, 40, 40))), bb)
    with pytest.raises(ShapeError):
        backbone_forward(Tensor(np.zeros((1, 1, 64, 64))), bb)


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(channels=(32, 16, 64))
    with pytest.raises(ValueError):
        BackboneConfig(blocks_per_level=(1, 0, 1))


def test_select_level():
    levels = Backbone(BackboneConfig())(_image(2))
    assert select_level(levels, 1) is levels.f1
    assert select_level(levels, 3).shape == (2, 64, 64 // 16, 64 // 16)
    with pytest.raises(ValueError):
        select_level(levels, 0)


def test_random_level_reproducible():
    picks = [random_level(s) for s in range(50)]
    assert picks == [random_level(s) for s in range(50)]
    assert set(picks) == {1, 2, 3}


def test_seeded_init_reproducible():
    a = Backbone(BackboneConfig(seed=4)).parameters()
    b = Backbone(BackboneConfig(seed=4)).parameters()
    c = Backbone(BackboneConfig(seed=5)).parameters()
    assert all(np.array_equal(p.data, q.data) for p, q in zip(a, b))
    assert not np.array_equal(a[0].data, c[0].data)


def test_blocks_per_level_adds_params():
    bb = Backbone(BackboneConfig(blocks_per_level=(2, 1, 3)))
    names = {p.name for p in bb.parameters()}
    assert "backbone.level1.conv1.weight" in names and "backbone.level3.conv2.bias" in names
    assert [f.shape[2] for f in bb(_image(size=32))] == [8, 4, 2]


def test_config_file(tmp_path):
    path = tmp_path / "bb.cfg"
    path.write_text("# widths\nchannels = 8, 12, 20\nblocks_per_level = 1 2 1\nstem_channels = 4\nseed = 9\n")
    cfg = BackboneConfig.from_file(path)
    assert cfg == BackboneConfig(channels=(8, 12, 20), blocks_per_level=(1, 2, 1), stem_channels=4, seed=9)
    path.write_text("depth = 3\n")
    with pytest.raises(ValueError):
        BackboneConfig.from_file(path)


def test_gradient_reaches_stem():
    bb = Backbone(BackboneConfig())
    levels = bb(_image())
    tsum(levels.f3).backward()
    assert np.abs(bb.params["stem.weight"].grad).sum() > 0
